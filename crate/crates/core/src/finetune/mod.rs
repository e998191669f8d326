//! Low-precision fine-tuning of a small CNN with a straight-through
//! estimator, starting from a full-precision model.
//!
//! Full-precision shadow weights receive every gradient update; the
//! quantized weights used in the forward pass are re-derived from them at
//! every step.

pub mod data;
pub mod net;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::engine::{apply_recomputed_batchnorm, Mode};
use crate::error::{Error, Result};
use crate::fixed_point::{FixedPointFormat, MANTISSA_MAX};
use crate::model_io::{LayerKind, LayerSpec, Model, ModelGraph, TensorRecord, TensorStore};
use crate::pipeline::{evaluate, post_training_quantize};
use crate::tensor::Tensor;
use crate::ternarizer::QuantConfig;

pub use data::{Dataset, ToyData, ToyTask};
pub use net::{backward, forward, Forward, Params, Quantizers, ToyArch, ACT_POINTS, PARAM_NAMES};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Full-precision shadow weights.
    pub params: Params,
    pub velocity: Params,
    pub epoch: usize,
    pub step: usize,
}

impl TrainState {
    pub fn new(params: Params) -> Self {
        let velocity = params.zeros_like();
        Self { params, velocity, epoch: 0, step: 0 }
    }

    /// SGD with momentum: `v = m v + g; w -= lr v`.
    pub fn sgd_step(&mut self, grad: &Params, lr: f64, momentum: f64) {
        for ((w, v), g) in self.params.tensors_mut().into_iter().zip(self.velocity.tensors_mut()).zip(grad.tensors()) {
            for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = momentum * *v + g;
                *w -= lr * *v;
            }
        }
        self.step += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// The learning rate is multiplied by this after every epoch.
    pub lr_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
    /// `None` trains in full precision.
    pub quant: Option<QuantConfig>,
}

impl TrainConfig {
    /// Fine-tuning defaults: lr 1e-4, momentum 0.9, batches of 4.
    pub fn finetune(quant: QuantConfig, epochs: usize) -> Self {
        Self { epochs, lr: 1e-4, lr_decay: 1.0, momentum: 0.9, batch_size: 4, seed: 0, quant: Some(quant) }
    }

    pub fn float(epochs: usize) -> Self {
        Self { epochs, lr: 0.02, lr_decay: 0.7, momentum: 0.9, batch_size: 32, seed: 0, quant: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss of the epoch (absent for the initial point).
    pub loss: Option<f64>,
    pub accuracy: f64,
}

/// Max-abs formats of every activation point over the calibration batches,
/// with weights quantized as configured.
pub fn calibrate_points(
    p: &Params,
    batches: &[(Tensor, Vec<usize>)],
    weights: Option<QuantConfig>,
) -> Result<[FixedPointFormat; 6]> {
    if batches.is_empty() {
        return Err(Error::Empty("calibration set"));
    }
    let q = Quantizers { weights, activations: None };
    let mut mx = [0.0f64; 6];
    for (x, y) in batches {
        let fw = forward(p, x, y, &q)?;
        for (m, v) in mx.iter_mut().zip(fw.point_max) {
            *m = m.max(v);
        }
    }
    Ok(mx.map(|m| FixedPointFormat::covering(m, MANTISSA_MAX)))
}

/// Mean loss over labelled batches.
fn mean_loss(p: &Params, batches: &[(Tensor, Vec<usize>)], q: &Quantizers) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for (x, y) in batches {
        total += forward(p, x, y, q)?.loss * y.len() as f64;
        count += y.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Train for `cfg.epochs` epochs, evaluating before the first and after
/// every epoch with `eval`. Training stops with [`Error::Diverged`] when an
/// epoch's mean loss exceeds ten times the starting loss, measured on the
/// calibration samples before the first step.
pub fn train(
    state: &mut TrainState,
    data: &ToyData,
    cfg: &TrainConfig,
    mut eval: impl FnMut(&Params) -> Result<f64>,
) -> Result<Vec<EpochRecord>> {
    let calib = data.train.head(data.task.calibration).batches(cfg.batch_size.max(32));
    let mut curve = vec![EpochRecord { epoch: state.epoch, loss: None, accuracy: eval(&state.params)? }];
    let mut initial: Option<f64> = None;
    let mut lr = cfg.lr;
    for _ in 0..cfg.epochs {
        let activations = match cfg.quant {
            Some(w) => Some(calibrate_points(&state.params, &calib, Some(w))?),
            None => None,
        };
        let q = Quantizers { weights: cfg.quant, activations };
        if initial.is_none() {
            initial = Some(mean_loss(&state.params, &calib, &q)?);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(state.epoch as u64);
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);
        let (mut total, mut count) = (0.0, 0usize);
        for (x, y) in data.train.batches_in(&order, cfg.batch_size) {
            let fw = forward(&state.params, &x, &y, &q)?;
            total += fw.loss * y.len() as f64;
            count += y.len();
            let grad = backward(&state.params, &fw)?;
            state.sgd_step(&grad, lr, cfg.momentum);
        }
        state.epoch += 1;
        lr *= cfg.lr_decay;
        let loss = total / count.max(1) as f64;
        let init = initial.expect("set before the first step");
        if !loss.is_finite() || loss > 10.0 * init {
            return Err(Error::Diverged { epoch: state.epoch, loss, initial: init });
        }
        curve.push(EpochRecord { epoch: state.epoch, loss: Some(loss), accuracy: eval(&state.params)? });
    }
    Ok(curve)
}

/// The engine graph of the toy net.
pub fn toy_graph(arch: ToyArch) -> ModelGraph {
    let mut g = ModelGraph::new("x", vec![1, arch.size, arch.size]);
    g.push(LayerSpec::batchnorm("bn0", "x"));
    g.push(LayerSpec::conv("conv1", "bn0", arch.c1, 3, 1, 1).first());
    g.push(LayerSpec::batchnorm("bn1", "conv1"));
    g.push(LayerSpec::relu("relu1", "bn1"));
    g.push(LayerSpec::conv("conv2", "relu1", arch.c2, 3, 2, 1));
    g.push(LayerSpec::batchnorm("bn2", "conv2"));
    g.push(LayerSpec::relu("relu2", "bn2"));
    g.push(LayerSpec::fc("fc", "relu2", arch.classes));
    g
}

/// Export shadow weights as a float model. BN running statistics are the
/// population statistics of the calibration batches.
pub fn export_model(p: &Params, calibration: &[Tensor]) -> Result<Model> {
    let a = p.arch;
    let f = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
    let mut records = vec![
        TensorRecord::from_f32("conv1.w", &[a.c1, 1, 3, 3], &f(&p.conv1)),
        TensorRecord::from_f32("conv2.w", &[a.c2, a.c1, 3, 3], &f(&p.conv2)),
        TensorRecord::from_f32("fc.w", &[a.classes, a.features()], &f(&p.fc_w)),
        TensorRecord::from_f32("fc.b", &[a.classes], &f(&p.fc_b)),
    ];
    for (name, gamma, beta) in
        [("bn0", &p.bn0_gamma, &p.bn0_beta), ("bn1", &p.bn1_gamma, &p.bn1_beta), ("bn2", &p.bn2_gamma, &p.bn2_beta)]
    {
        let c = gamma.len();
        records.push(TensorRecord::from_f32(format!("{name}.gamma"), &[c], &f(gamma)));
        records.push(TensorRecord::from_f32(format!("{name}.beta"), &[c], &f(beta)));
        records.push(TensorRecord::from_f32(format!("{name}.mean"), &[c], &vec![0.0; c]));
        records.push(TensorRecord::from_f32(format!("{name}.var"), &[c], &vec![1.0; c]));
    }
    let mut model = Model::new(toy_graph(a), TensorStore::from_records(records)?)?;
    apply_recomputed_batchnorm(&mut model, calibration)?;
    Ok(model)
}

/// Read shadow weights back from a float toy model (the inverse of
/// [`export_model`] up to f32 rounding).
pub fn import_model(model: &Model) -> Result<Params> {
    let g = &model.graph;
    let layer = |n: &str| g.layer(n).ok_or_else(|| Error::InvalidGraph(format!("toy model has no layer `{n}`")));
    let (c1, c2, fc) = (layer("conv1")?, layer("conv2")?, layer("fc")?);
    let arch = ToyArch {
        size: g.input.shape.get(1).copied().unwrap_or(0),
        classes: fc.out_channels,
        c1: c1.out_channels,
        c2: c2.out_channels,
    };
    if toy_graph(arch).layers.iter().map(|l| (l.kind, &l.name)).ne(g.layers.iter().map(|l| (l.kind, &l.name)))
        || g.input.shape != [1, arch.size, arch.size]
    {
        return Err(Error::InvalidGraph("model is not the toy architecture".into()));
    }
    let get = |layer: &str, name: &str| -> Result<Vec<f64>> {
        let spec = g.layer(layer).expect("checked above");
        if spec.quant.is_some() {
            return Err(Error::ModeIncompatible {
                layer: layer.into(),
                detail: "fine-tuning needs float weights".into(),
            });
        }
        Ok(model.tensors.require(layer, name)?.to_f32()?.into_iter().map(f64::from).collect())
    };
    let bn = |n: &str| -> Result<(Vec<f64>, Vec<f64>)> {
        let refs = layer(n)?.bn.clone().expect("batchnorm refs");
        Ok((get(n, &refs.gamma)?, get(n, &refs.beta)?))
    };
    let ((g0, b0), (g1, b1), (g2, b2)) = (bn("bn0")?, bn("bn1")?, bn("bn2")?);
    debug_assert!(g.layers.iter().any(|l| l.kind == LayerKind::Fc));
    Ok(Params {
        arch,
        bn0_gamma: g0,
        bn0_beta: b0,
        conv1: get("conv1", c1.weight.as_deref().unwrap_or_default())?,
        bn1_gamma: g1,
        bn1_beta: b1,
        conv2: get("conv2", c2.weight.as_deref().unwrap_or_default())?,
        bn2_gamma: g2,
        bn2_beta: b2,
        fc_w: get("fc", fc.weight.as_deref().unwrap_or_default())?,
        fc_b: get("fc", fc.bias.as_deref().ok_or_else(|| Error::InvalidGraph("toy fc needs a bias".into()))?)?,
    })
}

/// Test accuracy of the exported model: float mode when `quant` is `None`,
/// otherwise integer mode after post-training quantization (weights, BN
/// recompute, activation calibration).
pub fn evaluate_params(p: &Params, data: &ToyData, quant: Option<QuantConfig>) -> Result<f64> {
    let calib: Vec<Tensor> = data.train.head(data.task.calibration).batches(64).into_iter().map(|(x, _)| x).collect();
    let model = export_model(p, &calib)?;
    let test = data.test.batches(250);
    match quant {
        None => evaluate(&model, Mode::Float, &test),
        Some(cfg) => {
            let (q, _) = post_training_quantize(&model, &cfg, &calib)?;
            evaluate(&q, Mode::Integer, &test)
        }
    }
}

/// Fine-tune with the straight-through estimator, recording integer-mode
/// accuracy after every epoch.
pub fn finetune(state: &mut TrainState, data: &ToyData, cfg: &TrainConfig) -> Result<Vec<EpochRecord>> {
    let quant = cfg.quant.ok_or_else(|| Error::Config("fine-tuning needs a weight quantization config".into()))?;
    train(state, data, cfg, |p| evaluate_params(p, data, Some(quant)))
}

/// Filters per shared init gain in the standard toy initialization.
pub const TOY_GAIN_GROUP: usize = 4;
/// Gains are drawn from `[1/8, 8]`.
pub const TOY_GAIN_SPREAD: f64 = 8.0;

/// The standard toy initialization (see [`Params::init_with_gains`]).
pub fn toy_init(arch: ToyArch, seed: u64) -> Params {
    Params::init_with_gains(arch, seed, TOY_GAIN_GROUP, TOY_GAIN_SPREAD)
}

/// Train a full-precision model from `init`, evaluating in float mode.
pub fn pretrain(data: &ToyData, init: Params, cfg: &TrainConfig) -> Result<(TrainState, Vec<EpochRecord>)> {
    let mut state = TrainState::new(init);
    let cfg = TrainConfig { quant: None, ..*cfg };
    let curve = train(&mut state, data, &cfg, |p| evaluate_params(p, data, None))?;
    Ok((state, curve))
}

/// Central finite-difference gradient of the loss for every parameter.
pub fn numeric_gradient(p: &Params, x: &Tensor, y: &[usize], q: &Quantizers, h: f64) -> Result<Params> {
    let mut grad = p.zeros_like();
    let mut probe = p.clone();
    for t in 0..PARAM_NAMES.len() {
        for i in 0..p.tensors()[t].len() {
            let orig = p.tensors()[t][i];
            probe.tensors_mut()[t][i] = orig + h;
            let up = forward(&probe, x, y, q)?.loss;
            probe.tensors_mut()[t][i] = orig - h;
            let down = forward(&probe, x, y, q)?.loss;
            probe.tensors_mut()[t][i] = orig;
            grad.tensors_mut()[t][i] = (up - down) / (2.0 * h);
        }
    }
    Ok(grad)
}
